//! Seeded synthetic classification tasks and the forgetting experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{GroupedClassifier, HeadKind};
use super::train::{
    fine_tune, incremental_train, top1_error, train_supervised, LabeledSample, TrainConfig,
    TrainError, TrainReport,
};

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Isotropic Gaussian clusters, `old_classes` for the base model plus
/// `new_classes` that only appear in the feedback set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterTask {
    pub dim: usize,
    pub old_classes: usize,
    pub new_classes: usize,
    /// Standard deviation of the cluster centres.
    pub center_scale: f64,
    /// Standard deviation of samples around their centre.
    pub spread: f64,
    /// Scale of the new-class centres relative to `center_scale`. Small
    /// values place new classes among the old ones rather than at random.
    pub new_center_scale: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ClusterTask {
    fn default() -> Self {
        Self {
            dim: 16,
            old_classes: 10,
            new_classes: 1,
            center_scale: 1.0,
            spread: 0.4,
            new_center_scale: 1.0,
            train_per_class: 200,
            test_per_class: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterData {
    pub train_old: Vec<LabeledSample>,
    pub test_old: Vec<LabeledSample>,
    pub train_new: Vec<LabeledSample>,
    pub test_new: Vec<LabeledSample>,
}

impl ClusterTask {
    pub fn generate(&self) -> ClusterData {
        let k = self.old_classes + self.new_classes;
        let mut centers_rng = stream(self.seed, 0);
        let centers: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                let scale = if c < self.old_classes {
                    self.center_scale
                } else {
                    self.center_scale * self.new_center_scale
                };
                gaussian(&mut centers_rng, self.dim)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect()
            })
            .collect();
        let mut train_rng = stream(self.seed, 1);
        let mut test_rng = stream(self.seed, 2);
        let sample = |rng: &mut ChaCha8Rng, c: usize, n: usize| -> Vec<LabeledSample> {
            (0..n)
                .map(|_| {
                    let x = centers[c]
                        .iter()
                        .zip(gaussian(rng, self.dim))
                        .map(|(m, z)| m + self.spread * z)
                        .collect();
                    LabeledSample::new(x, c)
                })
                .collect()
        };
        let mut data = ClusterData {
            train_old: Vec::new(),
            test_old: Vec::new(),
            train_new: Vec::new(),
            test_new: Vec::new(),
        };
        for c in 0..k {
            let train = sample(&mut train_rng, c, self.train_per_class);
            let test = sample(&mut test_rng, c, self.test_per_class);
            if c < self.old_classes {
                data.train_old.extend(train);
                data.test_old.extend(test);
            } else {
                data.train_new.extend(train);
                data.test_new.extend(test);
            }
        }
        data
    }
}

/// Classes defined by direction only: each sample is a noisy class direction
/// scaled by a random radius, so magnitude carries no class information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AngularTask {
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of the per-coordinate noise added to the unit
    /// class direction before rescaling.
    pub angular_noise: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for AngularTask {
    fn default() -> Self {
        Self {
            dim: 32,
            classes: 10,
            angular_noise: 0.25,
            radius_min: 0.2,
            radius_max: 4.0,
            train_per_class: 20,
            test_per_class: 200,
            seed: 0,
        }
    }
}

impl AngularTask {
    /// (train, test)
    pub fn generate(&self) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
        let mut dir_rng = stream(self.seed, 0);
        let dirs: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                let v = gaussian(&mut dir_rng, self.dim);
                let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                v.into_iter().map(|a| a / n).collect()
            })
            .collect();
        let sample = |rng: &mut ChaCha8Rng, n: usize| -> Vec<LabeledSample> {
            let mut out = Vec::with_capacity(n * self.classes);
            for _ in 0..n {
                for (c, d) in dirs.iter().enumerate() {
                    let v: Vec<f64> = d
                        .iter()
                        .zip(gaussian(rng, self.dim))
                        .map(|(a, z)| a + self.angular_noise * z)
                        .collect();
                    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                    let r = rng.gen_range(self.radius_min..=self.radius_max);
                    out.push(LabeledSample::new(
                        v.into_iter().map(|a| a * r / norm).collect(),
                        c,
                    ));
                }
            }
            out
        };
        let train = sample(&mut stream(self.seed, 1), self.train_per_class);
        let test = sample(&mut stream(self.seed, 2), self.test_per_class);
        (train, test)
    }
}

/// Settings for the base-then-update forgetting experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgettingExperiment {
    pub task: ClusterTask,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    pub base: TrainConfig,
    pub update: TrainConfig,
}

impl Default for ForgettingExperiment {
    /// New class centred among the old ones, angular head with margin 1.
    /// A softmax head's free bias lets the new class absorb old samples in
    /// ways distillation on old-class outputs cannot see.
    fn default() -> Self {
        let train = TrainConfig {
            learning_rate: 0.01,
            max_steps: 4000,
            margin: 1,
            ..TrainConfig::default()
        };
        Self {
            task: ClusterTask {
                new_center_scale: 0.0,
                ..ClusterTask::default()
            },
            hidden: vec![64, 64],
            head: HeadKind::ASoftmax,
            base: train.clone(),
            update: TrainConfig {
                new_data_rate: 0.25,
                alpha: 1.0,
                ..train
            },
        }
    }
}

/// Errors are fractions in [0, 1], measured on held-out test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub base_old_error: f64,
    pub fine_tune_old_error: f64,
    pub fine_tune_new_error: f64,
    pub incremental_old_error: f64,
    pub incremental_new_error: f64,
    pub base_training: TrainReport,
    pub fine_tune_training: TrainReport,
    pub incremental_training: TrainReport,
}

impl ForgettingExperiment {
    /// Trains a base model on the old classes, then updates copies of it on
    /// the new classes by plain fine-tuning and by distillation-regularized
    /// incremental training.
    pub fn run(&self) -> Result<ForgettingReport, TrainError> {
        let data = self.task.generate();
        let mut init_rng = stream(self.base.seed, 100);
        let init = GroupedClassifier::new(
            self.task.dim,
            &self.hidden,
            self.task.old_classes,
            self.head,
            &mut init_rng,
        )?;
        let base = train_supervised(&init, &data.train_old, &self.base)?;
        let tuned = fine_tune(&base.model, &data.train_new, &self.update)?;
        let incr = incremental_train(&base.model, &data.train_old, &data.train_new, &self.update)?;
        Ok(ForgettingReport {
            base_old_error: top1_error(&base.model, &data.test_old)?,
            fine_tune_old_error: top1_error(&tuned.model, &data.test_old)?,
            fine_tune_new_error: top1_error(&tuned.model, &data.test_new)?,
            incremental_old_error: top1_error(&incr.model, &data.test_old)?,
            incremental_new_error: top1_error(&incr.model, &data.test_new)?,
            base_training: base.report,
            fine_tune_training: tuned.report,
            incremental_training: incr.report,
        })
    }
}

/// Softmax versus angular head on the same angular task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadComparison {
    pub task: AngularTask,
    pub hidden: Vec<usize>,
    /// Shared by both heads; the margin settings only affect the angular one.
    pub train: TrainConfig,
}

impl Default for HeadComparison {
    /// Margin 4 with the blend annealed from 1000 down to 5, on a
    /// small-sample version of the angular task. The margin acts as a
    /// regularizer; with ample data both heads converge to the same error.
    fn default() -> Self {
        Self {
            task: AngularTask {
                train_per_class: 10,
                ..AngularTask::default()
            },
            hidden: vec![32],
            train: TrainConfig {
                learning_rate: 0.01,
                max_steps: 6000,
                margin: 4,
                margin_blend_start: 1000.0,
                margin_blend_decay: 0.1,
                margin_blend_min: 5.0,
                ..TrainConfig::default()
            },
        }
    }
}

impl HeadComparison {
    pub fn with_seed(seed: u64) -> Self {
        let d = Self::default();
        Self {
            task: AngularTask { seed, ..d.task },
            train: TrainConfig { seed, ..d.train },
            ..d
        }
    }

    /// Test top-1 errors as (softmax, a-softmax).
    pub fn run(&self) -> Result<(f64, f64), TrainError> {
        let (train, test) = self.task.generate();
        let mut errors = [0.0; 2];
        for (i, head) in [HeadKind::Softmax, HeadKind::ASoftmax]
            .into_iter()
            .enumerate()
        {
            let mut init_rng = stream(self.train.seed, 100);
            let init = GroupedClassifier::new(
                self.task.dim,
                &self.hidden,
                self.task.classes,
                head,
                &mut init_rng,
            )?;
            let out = train_supervised(&init, &train, &self.train)?;
            errors[i] = top1_error(&out.model, &test)?;
        }
        Ok((errors[0], errors[1]))
    }
}

//! Central finite-difference verification of the analytic gradients.
//!
//! Each check draws random points from a seeded stream, compares every
//! coordinate of the analytic gradient with a central difference, and
//! reports the worst relative error. Points within a hair of a kink of the
//! angular margin function are redrawn, since the derivative jumps there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{
    asoftmax_loss, asoftmax_loss_grad, distillation_loss, distillation_loss_grad, softmax_loss,
    softmax_loss_grad, task_loss, task_loss_grad, Margin,
};
use super::model::{Dense, GroupedClassifier, HeadKind};
use super::train::{LabeledSample, Objective};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    /// Coordinates whose relative error exceeded [`REL_TOL`].
    pub failures: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            points: 0,
            coordinates: 0,
            failures: 0,
            max_rel_error: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.points > 0
    }

    /// Compares `grad` with central differences of `f` around `point`.
    fn compare(&mut self, point: &[f64], grad: &[f64], mut f: impl FnMut(&[f64]) -> f64) {
        assert_eq!(point.len(), grad.len(), "gradient length");
        let mut p = point.to_vec();
        for i in 0..p.len() {
            let orig = p[i];
            p[i] = orig + STEP;
            let up = f(&p);
            p[i] = orig - STEP;
            let down = f(&p);
            p[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let scale = grad[i].abs().max(numeric.abs()).max(1e-3);
            let rel = (grad[i] - numeric).abs() / scale;
            self.max_rel_error = self.max_rel_error.max(rel);
            self.coordinates += 1;
            if rel.is_nan() || rel > REL_TOL {
                self.failures += 1;
            }
        }
        self.points += 1;
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-spread..spread)).collect()
}

fn near_kink(cos: f64, m: u32) -> bool {
    let frac = (m as f64 * cos.clamp(-1.0, 1.0).acos() / std::f64::consts::PI).fract();
    m > 1 && !(1e-3..=1.0 - 1e-3).contains(&frac)
}

fn cosine(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn head_from(weights: &[f64], inputs: usize, outputs: usize) -> Dense {
    Dense {
        inputs,
        outputs,
        weights: weights.to_vec(),
        bias: Vec::new(),
    }
}

fn with_params(model: &GroupedClassifier, params: &[f64]) -> GroupedClassifier {
    let mut m = model.clone();
    m.set_params(params).expect("same shape");
    m
}

fn alternate(i: usize) -> HeadKind {
    if i.is_multiple_of(2) {
        HeadKind::Softmax
    } else {
        HeadKind::ASoftmax
    }
}

/// Softmax cross-entropy with respect to the logits.
pub fn softmax(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new("softmax");
    for _ in 0..points {
        let k = rng.gen_range(2..8);
        let z = random_vec(&mut rng, k, 3.0);
        let label = rng.gen_range(0..k);
        let (_, g) = softmax_loss_grad(&z, label).expect("valid label");
        out.compare(&z, &g, |z| softmax_loss(z, label).expect("valid label"));
    }
    out
}

/// Angular-margin loss with respect to the feature and the class directions.
/// Direction gradients are projected onto the tangent space of the unit
/// sphere, since the loss normalizes rows internally.
pub fn asoftmax(m: u32, points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new(format!("a-softmax m={m}"));
    while out.points < points {
        let (dim, k) = (rng.gen_range(2..6), rng.gen_range(2..5));
        let dirs = head_from(&random_vec(&mut rng, dim * k, 1.0), dim, k).normalized_rows();
        let head = head_from(&dirs, dim, k);
        let x = random_vec(&mut rng, dim, 2.0);
        let label = rng.gen_range(0..k);
        if near_kink(cosine(head.row(label), &x), m) {
            continue;
        }
        let (_, hg) = asoftmax_loss_grad(&head, &x, label, m).expect("valid inputs");
        let mut tangent = hg.d_directions.clone();
        for j in 0..k {
            let w = &dirs[j * dim..(j + 1) * dim];
            let d = &hg.d_directions[j * dim..(j + 1) * dim];
            let along: f64 = w.iter().zip(d).map(|(a, b)| a * b).sum();
            for t in 0..dim {
                tangent[j * dim + t] = d[t] - along * w[t];
            }
        }
        // one point covers both argument blocks
        let mut both = GradCheck::new("");
        both.compare(&x, &hg.d_feature, |x| {
            asoftmax_loss(&head, x, label, m).expect("valid")
        });
        both.compare(&dirs, &tangent, |w| {
            asoftmax_loss(&head_from(w, dim, k), &x, label, m).expect("valid")
        });
        out.coordinates += both.coordinates;
        out.failures += both.failures;
        out.max_rel_error = out.max_rel_error.max(both.max_rel_error);
        out.points += 1;
    }
    out
}

/// Task loss of a whole model with respect to all parameters, alternating
/// heads and cycling margins.
pub fn task(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new("task loss through the model");
    let mut i = 0usize;
    while out.points < points {
        let head = alternate(i);
        let m = [1u32, 2, 4][i % 3];
        i += 1;
        let mut model = GroupedClassifier::new(3, &[4, 3], 3, head, &mut rng).expect("valid shape");
        // non-unit rows exercise the normalization chain rule
        let p: Vec<f64> = model
            .params()
            .iter()
            .map(|v| v * rng.gen_range(0.8..1.6))
            .collect();
        model.set_params(&p).expect("same shape");
        let x = random_vec(&mut rng, 3, 1.5);
        let label = rng.gen_range(0..3);
        if head == HeadKind::ASoftmax {
            let f = model.forward(&x).expect("valid input");
            let dirs = model.head_group().normalized_rows();
            if near_kink(cosine(&dirs[label * 3..label * 3 + 3], f.feature()), m) {
                continue;
            }
        }
        let mut grads = model.zero_gradients();
        task_loss_grad(&model, &x, label, Margin::exact(m), 1.0, &mut grads).expect("valid");
        out.compare(&p, &grads.flat(), |q| {
            task_loss(&with_params(&model, q), &x, label, Margin::exact(m)).expect("valid")
        });
    }
    out
}

/// Distillation distance of an expanded student from its teacher.
pub fn distillation(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new("distillation");
    for i in 0..points {
        let teacher =
            GroupedClassifier::new(3, &[4, 3], 2, alternate(i), &mut rng).expect("valid shape");
        let mut student = teacher.expand_output_layer(1).expect("valid");
        let p: Vec<f64> = student
            .params()
            .iter()
            .map(|v| v + rng.gen_range(-0.3..0.3))
            .collect();
        student.set_params(&p).expect("same shape");
        let batch: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 3, 1.5)).collect();
        let mut grads = student.zero_gradients();
        distillation_loss_grad(&teacher, &student, &batch, 1.0, &mut grads).expect("valid");
        out.compare(&p, &grads.flat(), |q| {
            distillation_loss(&teacher, &with_params(&student, q), &batch).expect("valid")
        });
    }
    out
}

/// Weighted task plus distillation objective used by incremental training.
pub fn composite(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = GradCheck::new("task + distillation objective");
    for i in 0..points {
        let teacher =
            GroupedClassifier::new(3, &[5, 4], 2, alternate(i), &mut rng).expect("valid shape");
        let mut student = teacher.expand_output_layer(1).expect("valid");
        let p: Vec<f64> = student
            .params()
            .iter()
            .map(|v| v + rng.gen_range(-0.2..0.2))
            .collect();
        student.set_params(&p).expect("same shape");
        let new: Vec<LabeledSample> = (0..3)
            .map(|_| LabeledSample::new(random_vec(&mut rng, 3, 1.5), 2))
            .collect();
        let old: Vec<LabeledSample> = (0..5)
            .map(|_| LabeledSample::new(random_vec(&mut rng, 3, 1.5), rng.gen_range(0..2)))
            .collect();
        let new_refs: Vec<&LabeledSample> = new.iter().collect();
        let old_refs: Vec<&LabeledSample> = old.iter().collect();
        let objective = Objective {
            teacher: Some(&teacher),
            alpha: rng.gen_range(0.0..2.0),
            lambda: rng.gen_range(0.0..2.0),
            margin: Margin { m: 2, blend: 0.5 },
        };
        let (_, g) = objective
            .loss_grad(&student, &new_refs, &old_refs)
            .expect("valid");
        out.compare(&p, &g, |q| {
            objective
                .loss(&with_params(&student, q), &new_refs, &old_refs)
                .expect("valid")
        });
    }
    out
}

/// Every check at `points` random points each.
pub fn all(points: usize) -> Vec<GradCheck> {
    vec![
        softmax(points, 1),
        asoftmax(1, points, 2),
        asoftmax(2, points, 3),
        asoftmax(4, points, 4),
        task(points, 5),
        distillation(points, 6),
        composite(points, 7),
    ]
}
